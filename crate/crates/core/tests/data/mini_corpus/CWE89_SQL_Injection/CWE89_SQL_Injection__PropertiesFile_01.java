/* TEMPLATE GENERATED TESTCASE FILE
Filename: CWE89_SQL_Injection__PropertiesFile_01.java
Label Definition File: CWE89_SQL_Injection.label.xml
Template File: sources-sink-01.tmpl.java
*/
/*
* @description
* CWE: 89 SQL Injection
* BadSource: PropertiesFile Read data from an untrusted source
* GoodSource: A hardcoded string
* Flow Variant: 01
*
* */

package testcases.CWE89_SQL_Injection;

import testcasesupport.*;
import java.io.*;
import java.util.*;
import java.sql.*;

public class CWE89_SQL_Injection__PropertiesFile_01 extends AbstractTestCase
{
    public void bad() throws Throwable
    {
        String data;
        /* FLAW: data read from an untrusted source */
        Properties properties = new Properties();
        FileInputStream streamFileInput = new FileInputStream("../common/config.properties");
        properties.load(streamFileInput);
        data = properties.getProperty("data");
        streamFileInput.close();

        Connection dbConnection = IO.getDBConnection();
        Statement sqlStatement = dbConnection.createStatement();
        /* POTENTIAL FLAW: data concatenated into a query */
        Boolean result = sqlStatement.execute("insert into users (status) values ('updated') where name='" + data + "'");
        IO.writeLine("result: " + result);
        dbConnection.close();
    }

    public void good() throws Throwable
    {
        goodG2B();
        goodB2G();
    }

    /* goodG2B() - use goodsource and badsink */
    private void goodG2B() throws Throwable
    {
        String data;
        /* FIX: use a hardcoded string */
        data = "foo";

        Connection dbConnection = IO.getDBConnection();
        Statement sqlStatement = dbConnection.createStatement();
        /* POTENTIAL FLAW: data concatenated into a query */
        Boolean result = sqlStatement.execute("insert into users (status) values ('updated') where name='" + data + "'");
        IO.writeLine("result: " + result);
        dbConnection.close();
    }

    private void goodB2G() throws Throwable
    {
        String data = null;
        /* POTENTIAL FLAW: untrusted source */
        Properties properties = new Properties();
        FileInputStream streamFileInput = new FileInputStream("../common/config.properties");
        properties.load(streamFileInput);
        data = properties.getProperty("data");
        streamFileInput.close();

        Connection dbConnection = IO.getDBConnection();
        /* FIX: parameterized query */
        PreparedStatement sqlStatement = dbConnection.prepareStatement("insert into users (status) values ('updated') where name=?");
        sqlStatement.setString(1, data);
        Boolean result = sqlStatement.execute();
        IO.writeLine("result: " + result);
        dbConnection.close();
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
