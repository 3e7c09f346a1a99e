/* TEMPLATE GENERATED TESTCASE FILE
Filename: CWE23_Relative_Path_Traversal__PropertiesFile_02.java
Label Definition File: CWE23_Relative_Path_Traversal.label.xml
Template File: sources-sink-02.tmpl.java
*/
/*
* @description
* CWE: 23 Relative Path Traversal
* BadSource: PropertiesFile Read data from an untrusted source
* GoodSource: A hardcoded string
* Flow Variant: 02
*
* */

package testcases.CWE23_Relative_Path_Traversal;

import testcasesupport.*;
import java.io.*;
import java.util.*;
import java.io.File;

public class CWE23_Relative_Path_Traversal__PropertiesFile_02 extends AbstractTestCase
{
    public void bad() throws Throwable
    {
        String data = null;
        if (true)
        {
            /* FLAW: data read from an untrusted source */
            Properties properties = new Properties();
            FileInputStream streamFileInput = new FileInputStream("../common/config.properties");
            properties.load(streamFileInput);
            data = properties.getProperty("data");
            streamFileInput.close();
        }

        String root = "/home/user/uploads/";
        /* POTENTIAL FLAW: no validation of the path */
        File file = new File(root + data);
        if (file.exists())
        {
            FileInputStream streamFileInput = new FileInputStream(file);
            IO.writeLine("opened " + file.getName());
            streamFileInput.close();
        }
    }

    public void good() throws Throwable
    {
        goodG2B();
    }

    /* goodG2B() - use goodsource and badsink */
    private void goodG2B() throws Throwable
    {
        String data;
        /* FIX: use a hardcoded string */
        data = "foo";

        String root = "/home/user/uploads/";
        /* POTENTIAL FLAW: no validation of the path */
        File file = new File(root + data);
        if (file.exists())
        {
            FileInputStream streamFileInput = new FileInputStream(file);
            IO.writeLine("opened " + file.getName());
            streamFileInput.close();
        }
    }

    /* Below is the main(). It is only used when building this testcase on
     * its own for testing or for building a binary to use in testing binary
     * analysis tools. It is not used when compiling all the testcases as one
     * application, which is how source code analysis tools are tested.
     */
    public static void main(String[] args) throws ClassNotFoundException,
           InstantiationException, IllegalAccessException
    {
        mainFromParent(args);
    }
}
